//! Interaction proposal generation from externally produced detections.
//!
//! Detections are consumed, never produced: the detector is a pluggable
//! source feeding the file interface below. Pair candidates are gated by
//! IoU and turned into the four network inputs (C1/C2/I slices plus the
//! geometric pair map).

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    interaction_region, iou, rasterize_pair_map, BoundingBox, GeometricMap, IouGate,
};
use crate::imaging::RgbFrame;

pub const DETECTIONS_FORMAT_VERSION: u32 = 1;

/// One detector output box with its confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    bbox: BoundingBox,
    confidence: f64,
    frame_id: u64,
    detection_id: u32,
}

impl Detection {
    pub fn new(bbox: BoundingBox, confidence: f64, frame_id: u64, detection_id: u32) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) || !confidence.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Detection {
            bbox,
            confidence,
            frame_id,
            detection_id,
        })
    }

    pub fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn frame_id(&self) -> u64 {
        self.frame_id
    }

    pub fn detection_id(&self) -> u32 {
        self.detection_id
    }
}

/// An ordered detection pair that passed the IoU gate, with its
/// interaction-region box. Ordering is canonical: `a.detection_id <
/// b.detection_id`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteractionProposal {
    a: Detection,
    b: Detection,
    region: BoundingBox,
    iou: f64,
    frame_id: u64,
}

impl InteractionProposal {
    /// Builds a proposal from an unordered pair, swapping into canonical
    /// order. Fails when the pair does not pass the gate.
    pub fn new(a: Detection, b: Detection, gate: &IouGate) -> Result<Self> {
        if a.frame_id != b.frame_id {
            return Err(Error::InvalidArgument(format!(
                "pair spans frames {} and {}",
                a.frame_id, b.frame_id
            )));
        }
        if a.detection_id == b.detection_id {
            return Err(Error::InvalidArgument(format!(
                "pair reuses detection id {}",
                a.detection_id
            )));
        }
        let (a, b) = if a.detection_id < b.detection_id {
            (a, b)
        } else {
            (b, a)
        };
        let value = iou(&a.bbox, &b.bbox);
        if !gate.passes(value) {
            return Err(Error::InvalidArgument(format!(
                "pair iou {value:.4} outside gate ({}, {})",
                gate.lower, gate.upper
            )));
        }
        let region = interaction_region(&a.bbox, &b.bbox)?;
        Ok(InteractionProposal {
            a,
            b,
            region,
            iou: value,
            frame_id: a.frame_id,
        })
    }

    pub fn a(&self) -> &Detection {
        &self.a
    }

    pub fn b(&self) -> &Detection {
        &self.b
    }

    pub fn region(&self) -> &BoundingBox {
        &self.region
    }

    pub fn iou(&self) -> f64 {
        self.iou
    }

    pub fn frame_id(&self) -> u64 {
        self.frame_id
    }
}

/// The four network inputs cropped from a frame for one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceTriple {
    pub c1: Array3<f64>,
    pub c2: Array3<f64>,
    pub i: Array3<f64>,
    pub geometric: GeometricMap,
}

impl SliceTriple {
    pub fn input_size(&self) -> usize {
        self.c1.shape()[1]
    }
}

/// Retains detections with confidence strictly above the threshold,
/// preserving input order.
pub fn filter_detections(dets: &[Detection], min_confidence: f64) -> Vec<Detection> {
    dets.iter()
        .copied()
        .filter(|d| d.confidence > min_confidence)
        .collect()
}

/// Considers every unordered pair with positive IoU and keeps those inside
/// the gate, in canonical order, sorted by `(a.detection_id,
/// b.detection_id)`.
pub fn generate_proposals(dets: &[Detection], gate: &IouGate) -> Result<Vec<InteractionProposal>> {
    if let Some(first) = dets.first() {
        if dets.iter().any(|d| d.frame_id != first.frame_id) {
            return Err(Error::InvalidArgument(
                "detections must come from a single frame".into(),
            ));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for d in dets {
        if !seen.insert(d.detection_id) {
            return Err(Error::InvalidArgument(format!(
                "duplicate detection id {} within frame",
                d.detection_id
            )));
        }
    }
    let mut proposals = Vec::new();
    for (idx, a) in dets.iter().enumerate() {
        for b in &dets[idx + 1..] {
            if iou(&a.bbox, &b.bbox) > 0.0 && gate.passes_boxes(&a.bbox, &b.bbox) {
                proposals.push(InteractionProposal::new(*a, *b, gate)?);
            }
        }
    }
    proposals.sort_by_key(|p| (p.a.detection_id, p.b.detection_id));
    Ok(proposals)
}

/// Crops C1, C2 and I, resizes them to `input_size`, and rasterizes the
/// geometric pair map. Boxes are clamped to the frame before cropping; a
/// box entirely outside the frame is an error.
pub fn extract_slices(
    frame: &RgbFrame,
    p: &InteractionProposal,
    input_size: usize,
    map_resolution: usize,
) -> Result<SliceTriple> {
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    let clamp = |b: &BoundingBox| b.clamped_to_frame(w, h).ok_or(Error::OutOfFrame);
    let c1 = frame.crop_resize(&clamp(p.a.bbox())?, input_size);
    let c2 = frame.crop_resize(&clamp(p.b.bbox())?, input_size);
    let i = frame.crop_resize(&clamp(&p.region)?, input_size);
    let geometric = rasterize_pair_map(&p.a.bbox, &p.b.bbox, map_resolution)?
        .with_pair_id(p.a.detection_id, p.b.detection_id);
    Ok(SliceTriple {
        c1,
        c2,
        i,
        geometric,
    })
}

/// Yields every `stride`-th item of a stream, starting with the first.
pub fn throttle_frames<I>(frames: I, stride: usize) -> Result<impl Iterator<Item = I::Item>>
where
    I: IntoIterator,
{
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    Ok(frames
        .into_iter()
        .enumerate()
        .filter_map(move |(idx, item)| (idx % stride == 0).then_some(item)))
}

/// Per-frame record of the detections file.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    pub frame_id: u64,
    pub detections: Vec<Detection>,
}

/// Image file name convention for frame directories.
pub fn frame_filename(frame_id: u64) -> String {
    format!("frame_{frame_id:06}.png")
}

#[derive(Serialize, Deserialize)]
struct VersionHeader {
    format_version: u32,
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    id: u32,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    confidence: f64,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    frame_id: u64,
    detections: Vec<DetectionRecord>,
}

/// Writes the line-delimited detections file: a `format_version` header
/// line followed by one frame record per line.
pub fn write_detections_file(path: impl AsRef<Path>, frames: &[FrameDetections]) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer(
        &mut out,
        &VersionHeader {
            format_version: DETECTIONS_FORMAT_VERSION,
        },
    )
    .map_err(|e| Error::corrupt(path.as_ref().display().to_string(), e.to_string()))?;
    out.write_all(b"\n")?;
    for frame in frames {
        let record = FrameRecord {
            frame_id: frame.frame_id,
            detections: frame
                .detections
                .iter()
                .map(|d| DetectionRecord {
                    id: d.detection_id,
                    x1: d.bbox.x1(),
                    y1: d.bbox.y1(),
                    x2: d.bbox.x2(),
                    y2: d.bbox.y2(),
                    confidence: d.confidence,
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| Error::corrupt(path.as_ref().display().to_string(), e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads and validates a detections file; parse failures name the line.
pub fn read_detections_file(path: impl AsRef<Path>) -> Result<Vec<FrameDetections>> {
    let display = path.as_ref().display().to_string();
    let file = std::fs::File::open(path.as_ref())?;
    let mut lines = std::io::BufReader::new(file).lines().enumerate();

    let (_, header_line) = lines
        .next()
        .ok_or_else(|| Error::corrupt(&display, "empty file"))?;
    let header: VersionHeader = serde_json::from_str(&header_line?)
        .map_err(|e| Error::parse(&display, 1, format!("bad header: {e}")))?;
    if header.format_version != DETECTIONS_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: header.format_version,
            expected: DETECTIONS_FORMAT_VERSION,
        });
    }

    let mut frames = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let record: FrameRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(&display, lineno, e.to_string()))?;
        let mut detections = Vec::with_capacity(record.detections.len());
        let mut ids = std::collections::BTreeSet::new();
        for raw in &record.detections {
            if !ids.insert(raw.id) {
                return Err(Error::parse(
                    &display,
                    lineno,
                    format!("duplicate detection id {}", raw.id),
                ));
            }
            let bbox = BoundingBox::new(raw.x1, raw.y1, raw.x2, raw.y2)
                .map_err(|e| Error::parse(&display, lineno, e.to_string()))?;
            detections.push(
                Detection::new(bbox, raw.confidence, record.frame_id, raw.id)
                    .map_err(|e| Error::parse(&display, lineno, e.to_string()))?,
            );
        }
        frames.push(FrameDetections {
            frame_id: record.frame_id,
            detections,
        });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(id: u32, x1: f64, y1: f64, x2: f64, y2: f64, conf: f64) -> Detection {
        Detection::new(BoundingBox::new(x1, y1, x2, y2).unwrap(), conf, 0, id).unwrap()
    }

    #[test]
    fn filter_is_strict_and_order_preserving() {
        let dets = vec![
            det(0, 0.0, 0.0, 1.0, 1.0, 0.9),
            det(1, 2.0, 0.0, 3.0, 1.0, 0.7),
            det(2, 4.0, 0.0, 5.0, 1.0, 0.5),
        ];
        let kept = filter_detections(&dets, 0.7);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].detection_id(), 0);

        assert!(filter_detections(&[], 0.7).is_empty());
        let all = filter_detections(&dets, 0.1);
        assert_eq!(all, dets);
    }

    #[test]
    fn proposals_from_three_detections() {
        // Brute-force enumeration of the C(3,2) pairs: exactly the (0, 1)
        // pair has iou 0.4; detection 2 is disjoint from both.
        let dets = vec![
            det(0, 0.0, 0.0, 10.0, 10.0, 0.9),
            // iou with det 0: inter 10*10*? -> choose overlap giving 0.4:
            // boxes (0,0,10,10) and (2.5,0,12.5,10): inter 75, union 125
            // -> 0.6; use (0,0,10,10) and (x,0,x+10,10) with inter
            // (10-x)*10, union (10+x)*10; iou = (10-x)/(10+x) = 0.4 at
            // x = 30/7.
            det(1, 30.0 / 7.0, 0.0, 30.0 / 7.0 + 10.0, 10.0, 0.9),
            det(2, 50.0, 50.0, 60.0, 60.0, 0.9),
        ];
        for a in 0..3 {
            for b in (a + 1)..3 {
                let v = iou(dets[a].bbox(), dets[b].bbox());
                let expected = a == 0 && b == 1;
                assert_eq!(IouGate::default().passes(v), expected, "pair {a},{b}");
            }
        }
        let proposals = generate_proposals(&dets, &IouGate::default()).unwrap();
        assert_eq!(proposals.len(), 1);
        assert_eq!(proposals[0].a().detection_id(), 0);
        assert_eq!(proposals[0].b().detection_id(), 1);
        assert!((proposals[0].iou() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn disjoint_detections_yield_no_proposals() {
        let dets = vec![
            det(0, 0.0, 0.0, 1.0, 1.0, 0.9),
            det(1, 5.0, 5.0, 6.0, 6.0, 0.9),
            det(2, 10.0, 10.0, 11.0, 11.0, 0.9),
        ];
        assert!(generate_proposals(&dets, &IouGate::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn heavy_occlusion_excluded() {
        // iou = (10-x)/(10+x) = 0.75 at x = 10/7.
        let x = 10.0 / 7.0;
        let dets = vec![
            det(0, 0.0, 0.0, 10.0, 10.0, 0.9),
            det(1, x, 0.0, x + 10.0, 10.0, 0.9),
        ];
        assert!((iou(dets[0].bbox(), dets[1].bbox()) - 0.75).abs() < 1e-12);
        assert!(generate_proposals(&dets, &IouGate::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dets = vec![
            det(3, 0.0, 0.0, 10.0, 10.0, 0.9),
            det(3, 1.0, 0.0, 11.0, 10.0, 0.9),
        ];
        assert!(matches!(
            generate_proposals(&dets, &IouGate::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn proposal_region_matches_interaction_region() {
        let a = det(7, 0.0, 0.0, 10.0, 10.0, 0.9);
        let b = det(2, 4.0, 2.0, 14.0, 12.0, 0.9);
        let p = InteractionProposal::new(a, b, &IouGate::default()).unwrap();
        // canonical order swaps the pair
        assert_eq!(p.a().detection_id(), 2);
        assert_eq!(p.b().detection_id(), 7);
        assert_eq!(
            p.region(),
            &interaction_region(a.bbox(), b.bbox()).unwrap()
        );
    }

    #[test]
    fn throttle_strides() {
        let frames: Vec<u64> = (0..10).collect();
        let kept: Vec<u64> = throttle_frames(frames.clone(), 5).unwrap().collect();
        assert_eq!(kept, vec![0, 5]);
        let all: Vec<u64> = throttle_frames(frames.clone(), 1).unwrap().collect();
        assert_eq!(all, frames);
        let short: Vec<u64> = throttle_frames(vec![10u64, 11, 12], 5).unwrap().collect();
        assert_eq!(short, vec![10]);
        assert!(throttle_frames(frames, 0).is_err());
    }

    #[test]
    fn extract_slices_shapes_and_determinism() {
        let mut frame = RgbFrame::zeros(32, 32);
        for (i, v) in frame.data_mut().iter_mut().enumerate() {
            *v = (i % 97) as f64 / 97.0;
        }
        let a = det(0, 2.0, 2.0, 18.0, 18.0, 0.9);
        let b = det(1, 10.0, 2.0, 26.0, 18.0, 0.9);
        let p = InteractionProposal::new(a, b, &IouGate::default()).unwrap();
        let s1 = extract_slices(&frame, &p, 12, 8).unwrap();
        let s2 = extract_slices(&frame, &p, 12, 8).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.c1.shape(), &[3, 12, 12]);
        assert_eq!(s1.c2.shape(), &[3, 12, 12]);
        assert_eq!(s1.i.shape(), &[3, 12, 12]);
        assert_eq!(s1.geometric.resolution(), 8);
        assert_eq!(s1.geometric.pair_id(), Some((0, 1)));
    }

    #[test]
    fn slice_equals_c1_when_region_is_a_box() {
        // b contains a, pair gated: region == a.bbox so I == C1.
        // iou = area(a)/area(b) must land in (0.2, 0.7).
        let mut frame = RgbFrame::zeros(40, 40);
        for (i, v) in frame.data_mut().iter_mut().enumerate() {
            *v = ((i * 13) % 51) as f64 / 51.0;
        }
        let a = det(0, 10.0, 10.0, 20.0, 20.0, 0.9); // area 100
        let b = det(1, 5.0, 5.0, 22.0, 22.0, 0.9); // area 289, iou ~ 0.346
        let p = InteractionProposal::new(a, b, &IouGate::default()).unwrap();
        assert_eq!(p.region(), a.bbox());
        let s = extract_slices(&frame, &p, 16, 8).unwrap();
        assert_eq!(s.i, s.c1);
    }

    #[test]
    fn out_of_frame_box_is_an_error() {
        let frame = RgbFrame::zeros(16, 16);
        let a = det(0, -30.0, -30.0, -10.0, -10.0, 0.9);
        let b = det(1, -25.0, -30.0, -5.0, -10.0, 0.9);
        let p = InteractionProposal::new(a, b, &IouGate::default()).unwrap();
        assert!(matches!(
            extract_slices(&frame, &p, 8, 8),
            Err(Error::OutOfFrame)
        ));
    }

    #[test]
    fn detections_file_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("detections.jsonl");
        let frames = vec![
            FrameDetections {
                frame_id: 0,
                detections: vec![det(0, 0.0, 0.0, 5.0, 5.0, 0.93)],
            },
            FrameDetections {
                frame_id: 5,
                detections: vec![],
            },
        ];
        write_detections_file(&path, &frames).unwrap();
        let back = read_detections_file(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].detections[0], frames[0].detections[0]);
        assert_eq!(back[1].frame_id, 5);

        // bad version
        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, "{\"format_version\":9}\n").unwrap();
        assert!(matches!(
            read_detections_file(&bad),
            Err(Error::FormatVersion { found: 9, .. })
        ));

        // corrupt record names the line
        let corrupt = dir.path().join("corrupt.jsonl");
        std::fs::write(
            &corrupt,
            "{\"format_version\":1}\n{\"frame_id\":0,\"detections\":[{\"id\":0}]}\n",
        )
        .unwrap();
        match read_detections_file(&corrupt) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn proposals_permutation_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6usize;
            let mut dets = Vec::new();
            for id in 0..n {
                let x1 = (id as f64) * 3.0 + (seed % 7) as f64 * 0.5;
                let y1 = ((id * 17 + seed as usize) % 9) as f64;
                let w = 4.0 + (id as f64 % 3.0) * 2.0;
                let h = 5.0;
                dets.push(det(id as u32, x1, y1, x1 + w, y1 + h, 0.95));
            }
            let gate = IouGate::default();
            let base = generate_proposals(&dets, &gate).unwrap();
            prop_assert!(base.len() <= n * (n - 1) / 2);
            for p in &base {
                prop_assert!(gate.passes(p.iou()));
                prop_assert!(p.a().detection_id() < p.b().detection_id());
            }
            let mut shuffled = dets.clone();
            shuffled.shuffle(&mut rng);
            let again = generate_proposals(&shuffled, &gate).unwrap();
            prop_assert_eq!(base, again);
        }
    }
}
