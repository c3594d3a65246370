//! Deterministic synthetic herd scenes.
//!
//! Agents render as colored body rectangles with a dark head disc whose
//! position encodes the individual action; interacting pairs are placed by
//! relative-pose templates solved to a target IoU inside the gate, and the
//! shared interaction region is painted with a class-specific marker. The
//! result is information-sufficient for single-frame recognition: actions
//! are color+shape coded, interactions are pose+marker coded.
//!
//! Everything is quantized to 8-bit levels at render time so PNG
//! round-trips are pixel-exact.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{interaction_region, iou, BoundingBox, IouGate};
use crate::imaging::RgbFrame;
use crate::proposal::{
    frame_filename, read_detections_file, write_detections_file, Detection, FrameDetections,
};
use crate::semantic_prior::ClassCatalog;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Scene-generation knobs. Interaction placement draws a target IoU from
/// `iou_target`, which must sit strictly inside the proposal gate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub frame_width: usize,
    pub frame_height: usize,
    pub num_agents: usize,
    pub interacting_pairs: usize,
    pub catalog: ClassCatalog,
    pub gate: IouGate,
    pub iou_target: (f64, f64),
    pub body_size: (f64, f64),
    pub max_retries: usize,
    /// Probability that a pair's member actions follow the class template
    /// (the remainder are uniform), keeping the co-occurrence prior
    /// informative but not degenerate.
    pub template_action_prob: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            frame_width: 128,
            frame_height: 128,
            num_agents: 6,
            interacting_pairs: 1,
            catalog: ClassCatalog::default(),
            gate: IouGate::default(),
            iou_target: (0.3, 0.6),
            body_size: (18.0, 28.0),
            max_retries: 200,
            template_action_prob: 0.75,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_agents < 2 * self.interacting_pairs {
            return Err(Error::InvalidArgument(format!(
                "{} agents cannot host {} interacting pairs",
                self.num_agents, self.interacting_pairs
            )));
        }
        if !(self.gate.lower < self.iou_target.0 && self.iou_target.1 < self.gate.upper) {
            return Err(Error::InvalidArgument(format!(
                "iou target {:?} must sit strictly inside the gate ({}, {})",
                self.iou_target, self.gate.lower, self.gate.upper
            )));
        }
        if self.body_size.0 < 4.0 || self.body_size.1 <= self.body_size.0 {
            return Err(Error::InvalidArgument(
                "body size range must be ascending and at least 4 px".into(),
            ));
        }
        Ok(())
    }
}

/// A labeled interacting pair, canonically ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledPair {
    pub a: u32,
    pub b: u32,
    pub class: usize,
}

/// One generated frame with its full annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedFrame {
    pub frame_id: u64,
    pub image: RgbFrame,
    pub detections: Vec<Detection>,
    /// `(detection_id, action index)` aligned with `detections`.
    pub actions: Vec<(u32, usize)>,
    pub interactions: Vec<LabeledPair>,
}

impl AnnotatedFrame {
    /// Checks every invariant the generator guarantees; `read_dataset`
    /// applies the same checks to untrusted input.
    pub fn validate(&self, catalog: &ClassCatalog, gate: &IouGate) -> Result<()> {
        let ids: std::collections::BTreeMap<u32, usize> = self
            .detections
            .iter()
            .enumerate()
            .map(|(i, d)| (d.detection_id(), i))
            .collect();
        if ids.len() != self.detections.len() {
            return Err(Error::InvalidArgument("duplicate detection ids".into()));
        }
        for d in &self.detections {
            let b = d.bbox();
            if b.x1() < 0.0
                || b.y1() < 0.0
                || b.x2() > self.image.width() as f64
                || b.y2() > self.image.height() as f64
            {
                return Err(Error::OutOfFrame);
            }
        }
        if self.actions.len() != self.detections.len() {
            return Err(Error::InvalidArgument(
                "every detection needs an action label".into(),
            ));
        }
        for &(id, action) in &self.actions {
            if !ids.contains_key(&id) {
                return Err(Error::InvalidArgument(format!(
                    "action label references unknown agent {id}"
                )));
            }
            if action >= catalog.num_actions() {
                return Err(Error::InvalidArgument(format!(
                    "action index {action} out of catalog range"
                )));
            }
        }
        for pair in &self.interactions {
            let (Some(&ia), Some(&ib)) = (ids.get(&pair.a), ids.get(&pair.b)) else {
                return Err(Error::InvalidArgument(format!(
                    "interaction references unknown agents ({}, {})",
                    pair.a, pair.b
                )));
            };
            if pair.a >= pair.b {
                return Err(Error::InvalidArgument(
                    "interaction pair is not canonically ordered".into(),
                ));
            }
            if pair.class >= catalog.num_interactions() {
                return Err(Error::InvalidArgument(format!(
                    "interaction class {} out of catalog range",
                    pair.class
                )));
            }
            let v = iou(
                self.detections[ia].bbox(),
                self.detections[ib].bbox(),
            );
            if !gate.passes(v) {
                return Err(Error::InvalidArgument(format!(
                    "labeled pair ({}, {}) has iou {v:.4} outside the gate",
                    pair.a, pair.b
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// motifs
// ---------------------------------------------------------------------------

const ACTION_PALETTE: [[u8; 3]; 6] = [
    [38, 191, 51],   // grazing: green
    [51, 89, 230],   // lying: blue
    [191, 191, 191], // standing: gray
    [230, 51, 38],   // riding: red
    [230, 191, 38],
    [140, 38, 230],
];

const INTERACTION_PALETTE: [[u8; 3]; 6] = [
    [255, 255, 26], // mounting: yellow marker
    [255, 26, 255], // fighting: magenta marker
    [26, 255, 255], // smelling: cyan marker
    [255, 128, 0],
    [128, 255, 0],
    [0, 128, 255],
];

fn wheel_color(index: usize) -> [u8; 3] {
    // golden-ratio hue wheel for catalogs larger than the fixed palette
    let h = (index as f64 * 0.618_033_988_749) % 1.0;
    let (r, g, b) = hsv_to_rgb(h, 0.8, 0.85);
    [r, g, b]
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (u8, u8, u8) {
    let i = (h * 6.0).floor() as i64 % 6;
    let f = h * 6.0 - (h * 6.0).floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    ((r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8)
}

pub fn action_color(action: usize) -> [u8; 3] {
    ACTION_PALETTE
        .get(action)
        .copied()
        .unwrap_or_else(|| wheel_color(action + 11))
}

pub fn interaction_color(class: usize) -> [u8; 3] {
    INTERACTION_PALETTE
        .get(class)
        .copied()
        .unwrap_or_else(|| wheel_color(class + 29))
}

/// Body aspect ratio (height / width) per action: lying is flat, standing
/// and riding are tall.
fn action_aspect(action: usize) -> f64 {
    match action % 4 {
        0 => 0.75,
        1 => 0.55,
        2 => 1.25,
        _ => 1.05,
    }
}

/// Relative placement direction per interaction class: mounting stacks
/// vertically, fighting meets head-on, smelling approaches diagonally.
fn class_direction(class: usize, num_classes: usize) -> (f64, f64) {
    match class {
        0 => (0.0, -1.0),
        1 => (1.0, 0.0),
        2 => (0.70710678, 0.70710678),
        k => {
            let angle = (k as f64) * std::f64::consts::TAU / (num_classes.max(4) as f64);
            (angle.cos(), angle.sin())
        }
    }
}

/// Template member actions per interaction class (mounting pairs a rider
/// with a stander, and so on); indices wrap for small catalogs.
fn template_actions(class: usize, num_actions: usize) -> (usize, usize) {
    let pair = match class {
        0 => (3, 2),
        1 => (2, 2),
        2 => (2, 0),
        k => (k + 1, k + 3),
    };
    (pair.0 % num_actions, pair.1 % num_actions)
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

fn paint_rect(frame: &mut RgbFrame, b: &BoundingBox, color: [u8; 3]) {
    let (w, h) = (frame.width(), frame.height());
    let data = frame.data_mut();
    for y in 0..h {
        for x in 0..w {
            if b.contains_point(x as f64 + 0.5, y as f64 + 0.5) {
                for c in 0..3 {
                    data[[c, y, x]] = color[c] as f64 / 255.0;
                }
            }
        }
    }
}

fn paint_disc(frame: &mut RgbFrame, cx: f64, cy: f64, radius: f64, color: [u8; 3]) {
    let (w, h) = (frame.width(), frame.height());
    let data = frame.data_mut();
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= radius * radius {
                for c in 0..3 {
                    data[[c, y, x]] = color[c] as f64 / 255.0;
                }
            }
        }
    }
}

fn paint_agent(frame: &mut RgbFrame, b: &BoundingBox, action: usize, num_actions: usize) {
    paint_rect(frame, b, action_color(action));
    // head disc on an interior ellipse; its bearing encodes the action
    let angle = std::f64::consts::TAU * action as f64 / num_actions.max(1) as f64
        + std::f64::consts::FRAC_PI_2;
    let (cx, cy) = (
        (b.x1() + b.x2()) / 2.0 + 0.3 * b.width() * angle.cos(),
        (b.y1() + b.y2()) / 2.0 + 0.3 * b.height() * angle.sin(),
    );
    let radius = (b.width().min(b.height()) / 5.0).max(1.5);
    paint_disc(frame, cx, cy, radius, [20, 20, 20]);
}

// ---------------------------------------------------------------------------
// placement
// ---------------------------------------------------------------------------

fn sample_body(rng: &mut ChaCha8Rng, cfg: &SceneConfig, action: usize) -> (f64, f64) {
    let w = rng.gen_range(cfg.body_size.0..cfg.body_size.1);
    let h = (w * action_aspect(action)).max(4.0);
    (w.round(), h.round())
}

/// Solves the center offset along `dir` at which two boxes of the given
/// sizes reach the target IoU (binary search; overlap shrinks
/// monotonically with distance).
fn solve_offset(w1: f64, h1: f64, w2: f64, h2: f64, dir: (f64, f64), target: f64) -> (f64, f64) {
    let iou_at = |t: f64| {
        let b1 = BoundingBox::new(0.0, 0.0, w1, h1).expect("valid size");
        let (cx, cy) = (w1 / 2.0 + t * dir.0, h1 / 2.0 + t * dir.1);
        let b2 = BoundingBox::new(cx - w2 / 2.0, cy - h2 / 2.0, cx + w2 / 2.0, cy + h2 / 2.0)
            .expect("valid size");
        iou(&b1, &b2)
    };
    let mut lo = 0.0;
    let mut hi = w1 + w2 + h1 + h2;
    debug_assert!(iou_at(lo) > target && iou_at(hi) < target);
    for _ in 0..64 {
        let mid = (lo + hi) / 2.0;
        if iou_at(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = (lo + hi) / 2.0;
    (t * dir.0, t * dir.1)
}

struct PlacedAgent {
    bbox: BoundingBox,
    action: usize,
}

fn boxes_disjoint(b: &BoundingBox, others: &[PlacedAgent]) -> bool {
    others.iter().all(|o| iou(b, &o.bbox) == 0.0)
}

/// Generates one frame. Interaction classes are assigned by the caller
/// (`classes`, one per pair) so datasets can be balanced deterministically.
pub fn generate_scene_with_classes(
    cfg: &SceneConfig,
    frame_id: u64,
    classes: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<AnnotatedFrame> {
    cfg.validate()?;
    if classes.len() != cfg.interacting_pairs {
        return Err(Error::InvalidArgument(format!(
            "{} classes for {} pairs",
            classes.len(),
            cfg.interacting_pairs
        )));
    }
    let n_actions = cfg.catalog.num_actions();
    let n_inter = cfg.catalog.num_interactions();
    let (fw, fh) = (cfg.frame_width as f64, cfg.frame_height as f64);

    let mut image = RgbFrame::zeros(cfg.frame_height, cfg.frame_width);
    // speckled background so crops are never exactly constant
    {
        let data = image.data_mut();
        for y in 0..cfg.frame_height {
            for x in 0..cfg.frame_width {
                let level = rng.gen_range(18u8..=42) as f64 / 255.0;
                for c in 0..3 {
                    data[[c, y, x]] = level;
                }
            }
        }
    }

    let mut placed: Vec<PlacedAgent> = Vec::new();
    let mut interactions = Vec::new();

    for (pair_idx, &class) in classes.iter().enumerate() {
        if class >= n_inter {
            return Err(Error::InvalidArgument(format!(
                "interaction class {class} out of range {n_inter}"
            )));
        }
        let (ta, tb) = template_actions(class, n_actions);
        let (action_a, action_b) = if rng.gen_range(0.0..1.0) < cfg.template_action_prob {
            (ta, tb)
        } else {
            (rng.gen_range(0..n_actions), rng.gen_range(0..n_actions))
        };
        let dir = class_direction(class, n_inter);

        let mut attempt = 0;
        loop {
            attempt += 1;
            if attempt > cfg.max_retries {
                return Err(Error::Placement(cfg.max_retries));
            }
            // Resample sizes until the target IoU is reachable: very
            // dissimilar bodies cap the center-aligned IoU below the gate.
            let (w1, h1) = sample_body(rng, cfg, action_a);
            let (w2, h2) = sample_body(rng, cfg, action_b);
            let max_iou = {
                let inter = w1.min(w2) * h1.min(h2);
                inter / (w1 * h1 + w2 * h2 - inter)
            };
            let hi_feasible = cfg.iou_target.1.min(0.95 * max_iou);
            if hi_feasible <= cfg.iou_target.0 {
                continue;
            }
            let target = rng.gen_range(cfg.iou_target.0..hi_feasible);
            let (dx, dy) = solve_offset(w1, h1, w2, h2, dir, target);
            // bounding extent of the pair placed together
            let (lo_x, hi_x) = ((0.0f64).min(dx - w2 / 2.0 + w1 / 2.0), w1.max(w1 / 2.0 + dx + w2 / 2.0));
            let (lo_y, hi_y) = ((0.0f64).min(dy - h2 / 2.0 + h1 / 2.0), h1.max(h1 / 2.0 + dy + h2 / 2.0));
            let ext_w = hi_x - lo_x;
            let ext_h = hi_y - lo_y;
            if ext_w + 4.0 >= fw || ext_h + 4.0 >= fh {
                return Err(Error::Placement(attempt));
            }
            let ox = rng.gen_range(2.0..fw - ext_w - 2.0) - lo_x;
            let oy = rng.gen_range(2.0..fh - ext_h - 2.0) - lo_y;
            let b1 = BoundingBox::new(ox, oy, ox + w1, oy + h1)?;
            let c2x = ox + w1 / 2.0 + dx;
            let c2y = oy + h1 / 2.0 + dy;
            let b2 = BoundingBox::new(c2x - w2 / 2.0, c2y - h2 / 2.0, c2x + w2 / 2.0, c2y + h2 / 2.0)?;
            if !boxes_disjoint(&b1, &placed) || !boxes_disjoint(&b2, &placed) {
                continue;
            }
            debug_assert!(cfg.gate.passes(iou(&b1, &b2)));
            let id_a = placed.len() as u32;
            placed.push(PlacedAgent { bbox: b1, action: action_a });
            placed.push(PlacedAgent { bbox: b2, action: action_b });
            interactions.push(LabeledPair {
                a: id_a,
                b: id_a + 1,
                class,
            });
            let _ = pair_idx;
            break;
        }
    }

    let singles = cfg.num_agents - 2 * cfg.interacting_pairs;
    for _ in 0..singles {
        let action = rng.gen_range(0..n_actions);
        let (w, h) = sample_body(rng, cfg, action);
        let mut attempt = 0;
        loop {
            attempt += 1;
            if attempt > cfg.max_retries {
                return Err(Error::Placement(cfg.max_retries));
            }
            let ox = rng.gen_range(2.0..fw - w - 2.0);
            let oy = rng.gen_range(2.0..fh - h - 2.0);
            let b = BoundingBox::new(ox, oy, ox + w, oy + h)?;
            if boxes_disjoint(&b, &placed) {
                placed.push(PlacedAgent { bbox: b, action });
                break;
            }
        }
    }

    // render bodies and heads, then interaction markers over the regions
    for agent in &placed {
        paint_agent(&mut image, &agent.bbox, agent.action, n_actions);
    }
    for pair in &interactions {
        let region = interaction_region(
            &placed[pair.a as usize].bbox,
            &placed[pair.b as usize].bbox,
        )?;
        paint_rect(&mut image, &region, interaction_color(pair.class));
    }

    let mut detections = Vec::with_capacity(placed.len());
    let mut actions = Vec::with_capacity(placed.len());
    for (idx, agent) in placed.iter().enumerate() {
        let confidence = (rng.gen_range(0.75f64..0.99) * 100.0).round() / 100.0;
        detections.push(Detection::new(
            agent.bbox,
            confidence,
            frame_id,
            idx as u32,
        )?);
        actions.push((idx as u32, agent.action));
    }

    let frame = AnnotatedFrame {
        frame_id,
        image,
        detections,
        actions,
        interactions,
    };
    frame.validate(&cfg.catalog, &cfg.gate)?;
    Ok(frame)
}

/// Generates one frame with randomly drawn interaction classes.
pub fn generate_scene(
    cfg: &SceneConfig,
    frame_id: u64,
    rng: &mut ChaCha8Rng,
) -> Result<AnnotatedFrame> {
    let classes: Vec<usize> = (0..cfg.interacting_pairs)
        .map(|_| rng.gen_range(0..cfg.catalog.num_interactions()))
        .collect();
    generate_scene_with_classes(cfg, frame_id, &classes, rng)
}

/// Generates `num_frames` frames with interaction classes assigned
/// round-robin, so every class is evenly represented. Per-frame rng
/// streams derive from the seed, making generation order-independent.
pub fn generate_dataset(
    cfg: &SceneConfig,
    num_frames: usize,
    seed: u64,
) -> Result<Vec<AnnotatedFrame>> {
    let n = cfg.catalog.num_interactions();
    let mut frames = Vec::with_capacity(num_frames);
    let mut pair_counter = 0usize;
    for frame_id in 0..num_frames {
        let mut rng = rand::SeedableRng::seed_from_u64(seed);
        let rng: &mut ChaCha8Rng = {
            // one independent stream per frame
            let r: &mut ChaCha8Rng = &mut rng;
            r.set_stream(frame_id as u64 + 1);
            r
        };
        let classes: Vec<usize> = (0..cfg.interacting_pairs)
            .map(|_| {
                let c = pair_counter % n;
                pair_counter += 1;
                c
            })
            .collect();
        frames.push(generate_scene_with_classes(cfg, frame_id as u64, &classes, rng)?);
    }
    Ok(frames)
}

// ---------------------------------------------------------------------------
// dataset directory
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    individual_actions: Vec<String>,
    interactions: Vec<String>,
    frame_width: usize,
    frame_height: usize,
    frame_ids: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct VersionHeader {
    format_version: u32,
}

#[derive(Serialize, Deserialize)]
struct ActionRecord {
    id: u32,
    action: String,
}

#[derive(Serialize, Deserialize)]
struct FrameActions {
    frame_id: u64,
    actions: Vec<ActionRecord>,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    a: u32,
    b: u32,
    class: String,
}

#[derive(Serialize, Deserialize)]
struct FrameInteractions {
    frame_id: u64,
    interactions: Vec<PairRecord>,
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let display = path.display().to_string();
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(
        &mut out,
        &VersionHeader {
            format_version: DATASET_FORMAT_VERSION,
        },
    )
    .map_err(|e| Error::corrupt(&display, e.to_string()))?;
    out.write_all(b"\n")?;
    for record in records {
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| Error::corrupt(&display, e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::corrupt(&display, "empty file"))?;
    let header: VersionHeader = serde_json::from_str(&header?)
        .map_err(|e| Error::parse(&display, 1, format!("bad header: {e}")))?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: header.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::parse(&display, idx + 1, e.to_string()))?,
        );
    }
    Ok(records)
}

/// Writes the dataset directory: `manifest.json`, `frames/`,
/// `detections.jsonl`, `actions.jsonl`, `interactions.jsonl`.
pub fn write_dataset(
    frames: &[AnnotatedFrame],
    catalog: &ClassCatalog,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("frames"))?;
    let (fw, fh) = frames
        .first()
        .map(|f| (f.image.width(), f.image.height()))
        .unwrap_or((0, 0));
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        individual_actions: catalog.individual_actions().to_vec(),
        interactions: catalog.interactions().to_vec(),
        frame_width: fw,
        frame_height: fh,
        frame_ids: frames.iter().map(|f| f.frame_id).collect(),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::corrupt(dir.display().to_string(), e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), manifest_json)?;

    for frame in frames {
        frame
            .image
            .save_png(dir.join("frames").join(frame_filename(frame.frame_id)))?;
    }
    write_detections_file(
        dir.join("detections.jsonl"),
        &frames
            .iter()
            .map(|f| FrameDetections {
                frame_id: f.frame_id,
                detections: f.detections.clone(),
            })
            .collect::<Vec<_>>(),
    )?;
    write_jsonl(
        &dir.join("actions.jsonl"),
        frames.iter().map(|f| FrameActions {
            frame_id: f.frame_id,
            actions: f
                .actions
                .iter()
                .map(|&(id, action)| ActionRecord {
                    id,
                    action: catalog.individual_actions()[action].clone(),
                })
                .collect(),
        }),
    )?;
    write_jsonl(
        &dir.join("interactions.jsonl"),
        frames.iter().map(|f| FrameInteractions {
            frame_id: f.frame_id,
            interactions: f
                .interactions
                .iter()
                .map(|p| PairRecord {
                    a: p.a,
                    b: p.b,
                    class: catalog.interactions()[p.class].clone(),
                })
                .collect(),
        }),
    )?;
    Ok(())
}

/// Reads a dataset directory back, validating every generator invariant.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(Vec<AnnotatedFrame>, ClassCatalog)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let manifest_text = std::fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::corrupt(manifest_path.display().to_string(), e.to_string()))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: manifest.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let catalog = ClassCatalog::new(manifest.individual_actions, manifest.interactions)?;

    let detections = read_detections_file(dir.join("detections.jsonl"))?;
    let actions: Vec<FrameActions> = read_jsonl(&dir.join("actions.jsonl"))?;
    let pairs: Vec<FrameInteractions> = read_jsonl(&dir.join("interactions.jsonl"))?;
    if detections.len() != manifest.frame_ids.len()
        || actions.len() != manifest.frame_ids.len()
        || pairs.len() != manifest.frame_ids.len()
    {
        return Err(Error::corrupt(
            dir.display().to_string(),
            "annotation files disagree on frame count",
        ));
    }

    let gate = IouGate::default();
    let mut frames = Vec::with_capacity(manifest.frame_ids.len());
    for ((dets, acts), prs) in detections.into_iter().zip(actions).zip(pairs) {
        if dets.frame_id != acts.frame_id || dets.frame_id != prs.frame_id {
            return Err(Error::corrupt(
                dir.display().to_string(),
                format!("frame id mismatch across annotation files at {}", dets.frame_id),
            ));
        }
        let image = RgbFrame::load_png(dir.join("frames").join(frame_filename(dets.frame_id)))?;
        let actions = acts
            .actions
            .iter()
            .map(|r| Ok((r.id, catalog.action_index(&r.action)?)))
            .collect::<Result<Vec<_>>>()?;
        let interactions = prs
            .interactions
            .iter()
            .map(|r| {
                Ok(LabeledPair {
                    a: r.a,
                    b: r.b,
                    class: catalog.interaction_index(&r.class)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let frame = AnnotatedFrame {
            frame_id: dets.frame_id,
            image,
            detections: dets.detections,
            actions,
            interactions,
        };
        frame.validate(&catalog, &gate)?;
        frames.push(frame);
    }
    Ok((frames, catalog))
}

/// Splits frames into disjoint train/test sets by tail count.
pub fn split_frames(
    frames: Vec<AnnotatedFrame>,
    test_frames: usize,
) -> Result<(Vec<AnnotatedFrame>, Vec<AnnotatedFrame>)> {
    if test_frames >= frames.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot hold out {test_frames} of {} frames",
            frames.len()
        )));
    }
    let split = frames.len() - test_frames;
    let mut frames = frames;
    let test = frames.split_off(split);
    Ok((frames, test))
}
