//! Synthetic paired RGB/thermal scene generation with controllable
//! modality dependence, dataset emission (PPM/PGM pairs plus JSONL), and
//! split management.
//!
//! Scenes are Gaussian blobs on constant backgrounds. Warm bodies are bright
//! in thermal regardless of illumination and contribute nothing to RGB below
//! the visibility threshold; light sources render in RGB only; cold objects
//! are dark spots in thermal and reflective (illumination-scaled) in RGB.
//! Every question is answerable from its designated modality by
//! construction. Generation is parallel per scene with derived seeds, so
//! parallel and serial runs emit identical corpora.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::par;
use crate::rng::{self, derive_seed};
use crate::vocab::Vocab;

pub const GENERATOR_VERSION: u32 = 1;

/// Illumination below this leaves warm and cold objects invisible in RGB.
pub const RGB_VISIBILITY_THRESHOLD: f64 = 0.3;

const THERMAL_BACKGROUND: f64 = 0.25;

fn rgb_background(illumination: f64) -> f64 {
    0.05 + 0.45 * illumination
}

// ── Scene description ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ObjectKind {
    WarmBody,
    ColdObject,
    LightSource,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SceneObject {
    /// Center in pixels.
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
    pub kind: ObjectKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub objects: Vec<SceneObject>,
    /// Ambient light level in `[0, 1]`.
    pub illumination: f64,
    pub seed: u64,
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.illumination) {
            return Err(Error::contract(format!(
                "illumination {} outside [0, 1]",
                self.illumination
            )));
        }
        for o in &self.objects {
            if o.cy < 0.0 || o.cy >= self.height as f64 || o.cx < 0.0 || o.cx >= self.width as f64
            {
                return Err(Error::contract(format!(
                    "object center ({}, {}) outside {}x{}",
                    o.cy, o.cx, self.height, self.width
                )));
            }
        }
        Ok(())
    }
}

fn add_blob(pixels: &mut [f64], h: usize, w: usize, channels: usize, o: &SceneObject, amp: f64) {
    if amp == 0.0 {
        return;
    }
    let sigma = (o.radius / 2.0).max(0.5);
    let reach = (o.radius * 2.0).ceil() as isize;
    let cy = o.cy.round() as isize;
    let cx = o.cx.round() as isize;
    for y in (cy - reach).max(0)..=(cy + reach).min(h as isize - 1) {
        for x in (cx - reach).max(0)..=(cx + reach).min(w as isize - 1) {
            let dy = y as f64 - o.cy;
            let dx = x as f64 - o.cx;
            let g = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            for c in 0..channels {
                let idx = (y as usize * w + x as usize) * channels + c;
                pixels[idx] = (pixels[idx] + amp * g).clamp(0.0, 1.0);
            }
        }
    }
}

/// Render the aligned RGB (3-channel) and thermal (single-channel) pair.
/// Deterministic under the spec's seed; an empty scene comes out as the two
/// background constants.
pub fn generate_pair(spec: &SceneSpec) -> Result<(ImagePlane, ImagePlane)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rgb = vec![rgb_background(spec.illumination); h * w * 3];
    let mut thermal = vec![THERMAL_BACKGROUND; h * w];
    let lit = spec.illumination >= RGB_VISIBILITY_THRESHOLD;
    for o in &spec.objects {
        match o.kind {
            ObjectKind::WarmBody => {
                add_blob(&mut thermal, h, w, 1, o, 0.75);
                let rgb_amp = if lit { 0.4 * spec.illumination } else { 0.0 };
                add_blob(&mut rgb, h, w, 3, o, rgb_amp);
            }
            ObjectKind::ColdObject => {
                add_blob(&mut thermal, h, w, 1, o, -0.18);
                let rgb_amp = if lit { 0.35 * spec.illumination } else { 0.0 };
                add_blob(&mut rgb, h, w, 3, o, rgb_amp);
            }
            ObjectKind::LightSource => {
                add_blob(&mut rgb, h, w, 3, o, 0.85);
            }
        }
    }
    Ok((
        ImagePlane::new(h, w, 3, rgb)?,
        ImagePlane::new(h, w, 1, thermal)?,
    ))
}

// ── QA items ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "rgb")]
    Rgb,
    #[serde(rename = "ir")]
    Ir,
    #[serde(rename = "rgb+ir")]
    RgbIr,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Ir => "ir",
            Modality::RgbIr => "rgb+ir",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "ir" => Ok(Modality::Ir),
            "rgb+ir" => Ok(Modality::RgbIr),
            other => Err(Error::contract(format!("unknown modality tag '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuestionKind {
    WarmPresence,
    LightPresence,
    /// "are there at least k ..." with k in 1..=3.
    WarmAtLeast(usize),
}

pub fn question_text(kind: QuestionKind) -> String {
    match kind {
        QuestionKind::WarmPresence => "is there a person-like warm object ?".to_string(),
        QuestionKind::LightPresence => "is there a light source ?".to_string(),
        QuestionKind::WarmAtLeast(k) => {
            let word = ["one", "two", "three"][k - 1];
            format!("are there at least {word} person-like warm objects ?")
        }
    }
}

/// One benchmark/training item; the answer is binary.
#[derive(Debug, Clone, PartialEq)]
pub struct QaItem {
    pub id: String,
    pub pair_id: String,
    pub question: String,
    pub question_ids: Vec<usize>,
    pub answer_yes: bool,
    pub modality: Modality,
}

/// JSONL row; paths are relative to the dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub rgb: String,
    pub thermal: String,
    pub question: String,
    pub answer: String,
    pub modality: Modality,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsetCounts {
    pub total: usize,
    pub yes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: u32,
    pub seed: u64,
    pub n_scenes: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub train_items: usize,
    pub eval_items: usize,
    pub train_counts: HashMap<String, SubsetCounts>,
    pub eval_counts: HashMap<String, SubsetCounts>,
}

#[derive(Debug, Clone)]
pub struct DatasetPlan {
    pub n_scenes: usize,
    pub eval_fraction: f64,
    /// Fraction of ir scenes that ask a counting question instead of plain
    /// presence.
    pub counting_fraction: f64,
    pub image_h: usize,
    pub image_w: usize,
}

impl Default for DatasetPlan {
    fn default() -> Self {
        DatasetPlan {
            n_scenes: 400,
            eval_fraction: 0.2,
            counting_fraction: 0.25,
            image_h: 56,
            image_w: 56,
        }
    }
}

/// A fully generated scene: spec, rendered pair, and its QA items.
#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub pair_id: String,
    pub spec: SceneSpec,
    pub rgb: ImagePlane,
    pub thermal: ImagePlane,
    pub items: Vec<QaItem>,
}

fn place_object(
    rng: &mut rng::Stream,
    h: usize,
    w: usize,
    kind: ObjectKind,
    x_range: (f64, f64),
) -> SceneObject {
    let my = h as f64 / 8.0;
    let mx = w as f64 / 8.0;
    SceneObject {
        cy: rng.gen_range(my..h as f64 - my),
        cx: rng.gen_range(x_range.0 * w as f64 + mx..x_range.1 * w as f64 - mx),
        radius: rng.gen_range(0.07 * w as f64..0.125 * w as f64),
        kind,
    }
}

/// Subset tag cycle: rgb, ir, rgb+ir, ir. A rgb+ir scene carries both a warm
/// and a light question so the answer depends on which one the prompt asks.
fn scene_modality(index: usize) -> Modality {
    match index % 4 {
        0 => Modality::Rgb,
        1 | 3 => Modality::Ir,
        _ => Modality::RgbIr,
    }
}

fn n_train_scenes(plan: &DatasetPlan) -> usize {
    let n_eval = ((plan.n_scenes as f64) * plan.eval_fraction).round() as usize;
    plan.n_scenes - n_eval
}

/// Position of this scene within its (split, tag-slot) stream. Answers
/// alternate along these positions, so both splits stay balanced on their
/// own even though the split is a prefix cut.
fn within_split_position(index: usize, n_train: usize) -> usize {
    let r = index % 4;
    let q = index / 4;
    if index < n_train {
        q
    } else {
        let stream_members_in_train = if n_train > r { (n_train - r + 3) / 4 } else { 0 };
        q - stream_members_in_train
    }
}

/// Build scene `index` of the plan. Answers alternate deterministically per
/// (split, modality, question) stream so every subset stays balanced.
pub fn generate_scene(index: usize, master_seed: u64, plan: &DatasetPlan) -> Result<GeneratedScene> {
    let vocab = Vocab::toy();
    let seed = derive_seed(master_seed, 0x5ce4e, index as u64);
    let mut r = rng::stream(seed);
    let (h, w) = (plan.image_h, plan.image_w);
    let modality = scene_modality(index);
    let pair_id = format!("s{index:05}");
    let pos = within_split_position(index, n_train_scenes(plan));
    let mut objects = Vec::new();
    let mut drafts: Vec<(QuestionKind, bool)> = Vec::new();

    match modality {
        Modality::Rgb => {
            let yes = pos % 2 == 0;
            if yes {
                objects.push(place_object(&mut r, h, w, ObjectKind::LightSource, (0.0, 1.0)));
            }
            for _ in 0..r.gen_range(0..3) {
                objects.push(place_object(&mut r, h, w, ObjectKind::ColdObject, (0.0, 1.0)));
            }
            drafts.push((QuestionKind::LightPresence, yes));
        }
        Modality::Ir => {
            let counting = r.gen_bool(plan.counting_fraction);
            // the two ir slots (index % 4 == 1 and == 3) alternate in
            // opposite phase
            let yes = if index % 4 == 1 { pos % 2 == 0 } else { pos % 2 == 1 };
            let (kind, n_warm) = if counting {
                let k = r.gen_range(1..=3usize);
                let n = if yes {
                    r.gen_range(k..=3)
                } else {
                    r.gen_range(0..k)
                };
                (QuestionKind::WarmAtLeast(k), n)
            } else {
                (QuestionKind::WarmPresence, yes as usize)
            };
            for _ in 0..n_warm {
                objects.push(place_object(&mut r, h, w, ObjectKind::WarmBody, (0.0, 1.0)));
            }
            for _ in 0..r.gen_range(0..3) {
                objects.push(place_object(&mut r, h, w, ObjectKind::ColdObject, (0.0, 1.0)));
            }
            drafts.push((kind, yes));
        }
        Modality::RgbIr => {
            // period-4 answer pattern (Y,Y) (N,N) (Y,N) (N,Y): both questions
            // balanced, all four combinations occur, zero correlation
            let warm_yes = pos % 2 == 0;
            let light_yes = matches!(pos % 4, 0 | 3);
            if warm_yes {
                // warm on the left half, light on the right: no overlap
                objects.push(place_object(&mut r, h, w, ObjectKind::WarmBody, (0.0, 0.5)));
            }
            if light_yes {
                objects.push(place_object(&mut r, h, w, ObjectKind::LightSource, (0.5, 1.0)));
            }
            drafts.push((QuestionKind::WarmPresence, warm_yes));
            drafts.push((QuestionKind::LightPresence, light_yes));
        }
    }

    let illumination = match modality {
        Modality::Rgb => r.gen_range(0.05..0.9),
        // thermal-dependent scenes are dark so warm bodies stay RGB-invisible
        Modality::Ir | Modality::RgbIr => r.gen_range(0.05..0.25),
    };
    let spec = SceneSpec {
        height: h,
        width: w,
        objects,
        illumination,
        seed,
    };
    finish_scene(pair_id, spec, drafts, modality, &vocab)
}

fn finish_scene(
    pair_id: String,
    spec: SceneSpec,
    drafts: Vec<(QuestionKind, bool)>,
    modality: Modality,
    vocab: &Vocab,
) -> Result<GeneratedScene> {
    let (rgb, thermal) = generate_pair(&spec)?;
    let items = drafts
        .into_iter()
        .enumerate()
        .map(|(j, (kind, yes))| {
            let question = question_text(kind);
            QaItem {
                id: format!("{pair_id}-q{j}"),
                pair_id: pair_id.clone(),
                question_ids: vocab.tokenize(&question),
                question,
                answer_yes: yes,
                modality,
            }
        })
        .collect();
    Ok(GeneratedScene {
        pair_id,
        spec,
        rgb,
        thermal,
        items,
    })
}

/// Generate all scenes of a plan (parallel, order-stable).
pub fn generate_scenes(plan: &DatasetPlan, master_seed: u64) -> Result<Vec<GeneratedScene>> {
    let results = par::map_indexed(plan.n_scenes, |i| generate_scene(i, master_seed, plan));
    results.into_iter().collect()
}

fn subset_counts(items: &[&QaItem]) -> HashMap<String, SubsetCounts> {
    let mut map: HashMap<String, SubsetCounts> = HashMap::new();
    for it in items {
        let e = map
            .entry(it.modality.as_str().to_string())
            .or_insert(SubsetCounts { total: 0, yes: 0 });
        e.total += 1;
        if it.answer_yes {
            e.yes += 1;
        }
    }
    map
}

/// Write image pairs, `train.jsonl` / `eval.jsonl`, and `manifest.json` under
/// `out_dir`. Train and eval use disjoint image pairs (split by scene index),
/// and each subset's yes fraction stays within 5 points of one half.
pub fn emit_dataset(plan: &DatasetPlan, master_seed: u64, out_dir: &Path) -> Result<Manifest> {
    let scenes = generate_scenes(plan, master_seed)?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images)?;

    let n_eval = ((plan.n_scenes as f64) * plan.eval_fraction).round() as usize;
    let n_train = plan.n_scenes - n_eval;

    let mut train_rows = Vec::new();
    let mut eval_rows = Vec::new();
    let mut train_items: Vec<&QaItem> = Vec::new();
    let mut eval_items: Vec<&QaItem> = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let rgb_rel = format!("images/{}_rgb.ppm", scene.pair_id);
        let th_rel = format!("images/{}_th.pgm", scene.pair_id);
        scene.rgb.save_pnm(&out_dir.join(&rgb_rel))?;
        scene.thermal.save_pnm(&out_dir.join(&th_rel))?;
        for item in &scene.items {
            let record = DatasetRecord {
                id: item.id.clone(),
                rgb: rgb_rel.clone(),
                thermal: th_rel.clone(),
                question: item.question.clone(),
                answer: if item.answer_yes { "yes" } else { "no" }.to_string(),
                modality: item.modality,
            };
            if i < n_train {
                train_rows.push(record);
                train_items.push(item);
            } else {
                eval_rows.push(record);
                eval_items.push(item);
            }
        }
    }

    let write_jsonl = |path: PathBuf, rows: &[DatasetRecord]| -> Result<()> {
        let mut f = fs::File::create(path)?;
        for row in rows {
            let line = serde_json::to_string(row)
                .map_err(|e| Error::contract(format!("jsonl encode: {e}")))?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    };
    write_jsonl(out_dir.join("train.jsonl"), &train_rows)?;
    write_jsonl(out_dir.join("eval.jsonl"), &eval_rows)?;

    let manifest = Manifest {
        generator_version: GENERATOR_VERSION,
        seed: master_seed,
        n_scenes: plan.n_scenes,
        image_h: plan.image_h,
        image_w: plan.image_w,
        train_items: train_rows.len(),
        eval_items: eval_rows.len(),
        train_counts: subset_counts(&train_items),
        eval_counts: subset_counts(&eval_items),
    };
    let mf = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::contract(format!("manifest encode: {e}")))?;
    fs::write(out_dir.join("manifest.json"), mf)?;
    Ok(manifest)
}

/// A dataset row with its images loaded.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub item: QaItem,
    pub rgb: ImagePlane,
    pub thermal: ImagePlane,
}

/// Read one split back; image pairs shared by several items load once.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<LoadedSample>> {
    let vocab = Vocab::toy();
    let path = dir.join(format!("{split}.jsonl"));
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read '{}': {e}", path.display())))?;
    let mut cache: HashMap<String, ImagePlane> = HashMap::new();
    let mut load = |rel: &str| -> Result<ImagePlane> {
        if let Some(img) = cache.get(rel) {
            return Ok(img.clone());
        }
        let img = ImagePlane::load_pnm(&dir.join(rel))?;
        cache.insert(rel.to_string(), img.clone());
        Ok(img)
    };
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            offset: lineno as u64,
            message: format!("jsonl line {}: {e}", lineno + 1),
        })?;
        let pair_id = record
            .id
            .rsplit_once("-q")
            .map(|(p, _)| p.to_string())
            .unwrap_or_else(|| record.id.clone());
        out.push(LoadedSample {
            rgb: load(&record.rgb)?,
            thermal: load(&record.thermal)?,
            item: QaItem {
                id: record.id,
                pair_id,
                question_ids: vocab.tokenize(&record.question),
                question: record.question,
                answer_yes: record.answer.trim().eq_ignore_ascii_case("yes"),
                modality: record.modality,
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn empty_scene_renders_background_constants() {
        let spec = SceneSpec {
            height: 24,
            width: 24,
            objects: vec![],
            illumination: 0.4,
            seed: 0,
        };
        let (rgb, th) = generate_pair(&spec).unwrap();
        let bg = rgb_background(0.4);
        assert!(rgb.pixels().iter().all(|&v| v == bg));
        assert!(th.pixels().iter().all(|&v| v == THERMAL_BACKGROUND));
    }

    #[test]
    fn dark_scene_warm_body_is_thermal_only() {
        let body = SceneObject {
            cy: 28.0,
            cx: 28.0,
            radius: 6.0,
            kind: ObjectKind::WarmBody,
        };
        let spec = SceneSpec {
            height: 56,
            width: 56,
            objects: vec![body],
            illumination: 0.1,
            seed: 3,
        };
        let (rgb, th) = generate_pair(&spec).unwrap();
        let mut th_max: f64 = 0.0;
        let mut rgb_max: f64 = 0.0;
        for y in 22..34 {
            for x in 22..34 {
                th_max = th_max.max(th.get(y, x, 0));
                for c in 0..3 {
                    rgb_max = rgb_max.max(rgb.get(y, x, c));
                }
            }
        }
        assert!(th_max > 0.8, "thermal peak {th_max}");
        assert!(rgb_max < 0.2, "rgb leak {rgb_max}");
    }

    #[test]
    fn light_source_renders_in_rgb_only() {
        let lamp = SceneObject {
            cy: 20.0,
            cx: 20.0,
            radius: 5.0,
            kind: ObjectKind::LightSource,
        };
        let spec = SceneSpec {
            height: 40,
            width: 40,
            objects: vec![lamp],
            illumination: 0.1,
            seed: 4,
        };
        let (rgb, th) = generate_pair(&spec).unwrap();
        assert!(th.pixels().iter().all(|&v| v == THERMAL_BACKGROUND));
        assert!(rgb.get(20, 20, 0) > 0.8);
    }

    #[test]
    fn same_seed_renders_bit_identical_pairs() {
        let plan = DatasetPlan::default();
        let a = generate_scene(7, 99, &plan).unwrap();
        let b = generate_scene(7, 99, &plan).unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.thermal, b.thermal);
        assert_eq!(a.items, b.items);
        let c = generate_scene(8, 99, &plan).unwrap();
        assert_ne!(a.spec.seed, c.spec.seed);
    }

    #[test]
    fn ir_items_flip_answer_with_thermal_region_while_rgb_unchanged() {
        // generator self-test over 100 ir presence items: removing/adding the
        // warm body flips the gold answer and only the thermal plane moves
        let plan = DatasetPlan {
            n_scenes: 400,
            counting_fraction: 0.0,
            ..DatasetPlan::default()
        };
        let mut checked = 0;
        for i in 0..plan.n_scenes {
            if scene_modality(i) != Modality::Ir {
                continue;
            }
            let scene = generate_scene(i, 42, &plan).unwrap();
            let item = &scene.items[0];
            let mut flipped_spec = scene.spec.clone();
            if item.answer_yes {
                flipped_spec.objects.retain(|o| o.kind != ObjectKind::WarmBody);
            } else {
                flipped_spec.objects.push(SceneObject {
                    cy: plan.image_h as f64 / 2.0,
                    cx: plan.image_w as f64 / 2.0,
                    radius: 6.0,
                    kind: ObjectKind::WarmBody,
                });
            }
            let (rgb2, th2) = generate_pair(&flipped_spec).unwrap();
            assert_eq!(rgb2, scene.rgb, "scene {i}: rgb plane moved");
            assert_ne!(th2, scene.thermal, "scene {i}: thermal plane unchanged");
            checked += 1;
            if checked == 100 {
                break;
            }
        }
        assert!(checked >= 100, "only {checked} ir items available");
    }

    #[test]
    fn emitted_dataset_is_balanced_and_disjoint() {
        let dir = tempdir().unwrap();
        let plan = DatasetPlan {
            n_scenes: 100,
            ..DatasetPlan::default()
        };
        let manifest = emit_dataset(&plan, 7, dir.path()).unwrap();
        assert_eq!(manifest.n_scenes, 100);
        assert!(manifest.train_items > 0 && manifest.eval_items > 0);

        let train = load_split(dir.path(), "train").unwrap();
        let eval = load_split(dir.path(), "eval").unwrap();
        assert_eq!(train.len(), manifest.train_items);
        assert_eq!(eval.len(), manifest.eval_items);

        // disjoint image pairs
        let train_pairs: std::collections::HashSet<_> =
            train.iter().map(|s| s.item.pair_id.clone()).collect();
        let eval_pairs: std::collections::HashSet<_> =
            eval.iter().map(|s| s.item.pair_id.clone()).collect();
        assert!(train_pairs.is_disjoint(&eval_pairs));

        // yes fraction within +-5 points of one half per subset (up to the
        // one-item rounding floor on small subsets)
        for counts in [&manifest.train_counts, &manifest.eval_counts] {
            for (tag, c) in counts {
                let dev = (c.yes as f64 - c.total as f64 / 2.0).abs();
                assert!(
                    dev <= (0.05 * c.total as f64).max(1.0),
                    "{tag}: {} yes of {}",
                    c.yes,
                    c.total
                );
            }
        }

        // one image pair per scene on disk
        let n_images = std::fs::read_dir(dir.path().join("images")).unwrap().count();
        assert_eq!(n_images, 200);
    }

    #[test]
    fn counting_questions_reflect_warm_body_count() {
        let plan = DatasetPlan {
            n_scenes: 200,
            counting_fraction: 1.0,
            ..DatasetPlan::default()
        };
        let mut seen = 0;
        for i in 0..plan.n_scenes {
            if scene_modality(i) != Modality::Ir {
                continue;
            }
            let scene = generate_scene(i, 5, &plan).unwrap();
            let item = &scene.items[0];
            let warm = scene
                .spec
                .objects
                .iter()
                .filter(|o| o.kind == ObjectKind::WarmBody)
                .count();
            let k = match item.question.split_whitespace().nth(4) {
                Some("one") => 1,
                Some("two") => 2,
                Some("three") => 3,
                other => panic!("unexpected count word {other:?} in '{}'", item.question),
            };
            assert_eq!(item.answer_yes, warm >= k, "scene {i}: {warm} vs {k}");
            seen += 1;
        }
        assert!(seen > 50);
    }

    #[test]
    fn rgbir_scenes_carry_both_question_kinds() {
        let plan = DatasetPlan::default();
        let scene = generate_scene(2, 11, &plan).unwrap();
        assert_eq!(scene.items.len(), 2);
        assert!(scene.items[0].question.contains("warm"));
        assert!(scene.items[1].question.contains("light"));
        assert_eq!(scene.items[0].modality, Modality::RgbIr);
        // the two answers are decorrelated across scenes: spot check a few
        let answers: Vec<(bool, bool)> = (0..32)
            .filter(|i| scene_modality(*i) == Modality::RgbIr)
            .map(|i| {
                let s = generate_scene(i, 11, &plan).unwrap();
                (s.items[0].answer_yes, s.items[1].answer_yes)
            })
            .collect();
        assert!(answers.iter().any(|&(w, l)| w != l));
        assert!(answers.iter().any(|&(w, l)| w == l));
    }

    #[test]
    fn jsonl_schema_matches_contract() {
        let dir = tempdir().unwrap();
        let plan = DatasetPlan {
            n_scenes: 8,
            ..DatasetPlan::default()
        };
        emit_dataset(&plan, 3, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
        let first = text.lines().next().unwrap();
        let v: serde_json::Value = serde_json::from_str(first).unwrap();
        for key in ["id", "rgb", "thermal", "question", "answer", "modality"] {
            assert!(v.get(key).is_some(), "missing key {key}");
        }
        assert!(matches!(v["answer"].as_str(), Some("yes") | Some("no")));
        assert!(matches!(
            v["modality"].as_str(),
            Some("rgb") | Some("ir") | Some("rgb+ir")
        ));
    }
}
